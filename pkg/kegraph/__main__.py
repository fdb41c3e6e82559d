import sys

from kegraph.cli import main

sys.exit(main())
