import sys

from hetseg.cli import main

sys.exit(main())
