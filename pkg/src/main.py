import sys

from rana_compress.cli import main


if __name__ == "__main__":
    sys.exit(main())
