import sys

from hmoetrack.cli import main

sys.exit(main())
