from src.errors import ConfigError
from src.ingest.base import DatasetReader
from src.ingest.cocoa import CocoaDatasetReader
from src.ingest.d2s import D2SAmodalDatasetReader
from src.ingest.native import NativeDatasetReader

SUPPORTED_FORMATS = ("native", "cocoa", "d2s_amodal")


def get_dataset_reader(format_name: str) -> DatasetReader:
    """
    Returns the reader for a dataset format.

    Args:
        format_name (str): One of 'native', 'cocoa', 'd2s_amodal' (dashes accepted).

    Returns:
        DatasetReader: The selected reader.

    Raises:
        ConfigError: If the format is not supported.
    """
    key = format_name.lower().replace("-", "_")

    if key == "native":
        return NativeDatasetReader()
    elif key == "cocoa":
        return CocoaDatasetReader()
    elif key in ("d2s_amodal", "d2s"):
        return D2SAmodalDatasetReader()
    else:
        raise ConfigError(f"Unsupported dataset format: {format_name} (expected one of {', '.join(SUPPORTED_FORMATS)})")
