import sys

from kgetm.cli import main

sys.exit(main())
