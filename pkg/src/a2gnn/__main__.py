import sys

from a2gnn.cli import main

sys.exit(main())
