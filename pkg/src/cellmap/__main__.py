import sys

from cellmap.cli import main

sys.exit(main())
