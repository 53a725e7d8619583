import sys

from disp.cli import main

sys.exit(main())
