import sys

from src.cli import main

# Force UTF-8 encoding for stdout (Windows fix)
if sys.stdout.encoding != 'utf-8':
    sys.stdout.reconfigure(encoding='utf-8')

if __name__ == "__main__":
    sys.exit(main())
