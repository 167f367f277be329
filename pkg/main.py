import sys

from apga.harness.cli import main

if __name__ == "__main__":
    sys.exit(main())
