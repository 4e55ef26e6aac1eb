import sys

from caans.cli import main

sys.exit(main())
