import sys

from trafficbench.cli import main

sys.exit(main())
