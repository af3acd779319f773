import sys

from capsattack.cli import main

sys.exit(main())
