import sys

from evgrasp.cli import main

sys.exit(main())
