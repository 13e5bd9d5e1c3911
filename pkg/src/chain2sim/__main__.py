import sys

from chain2sim.cli import main

sys.exit(main())
