import sys

from stcloud.cli import main

sys.exit(main())
