import sys

from hemsim.cli import main

sys.exit(main())
