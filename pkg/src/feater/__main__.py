import sys

from feater.cli import main

sys.exit(main())
