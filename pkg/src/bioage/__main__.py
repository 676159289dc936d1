import sys

from bioage.cli import main

sys.exit(main())
