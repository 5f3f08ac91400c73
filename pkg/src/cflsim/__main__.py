import sys

from cflsim.cli import main

sys.exit(main())
