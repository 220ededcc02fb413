import sys

from satadapt.cli import main

sys.exit(main())
