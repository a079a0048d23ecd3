import sys

from ffvdfr.cli import main

sys.exit(main())
