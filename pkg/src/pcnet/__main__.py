import sys

from pcnet.cli import main

sys.exit(main())
