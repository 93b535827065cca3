import sys

from atvsnet.cli import main

sys.exit(main())
