import sys

from relaxed_align.cli import main

sys.exit(main())
