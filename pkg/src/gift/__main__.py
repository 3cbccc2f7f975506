import sys

from gift.harness.cli import main

sys.exit(main())
