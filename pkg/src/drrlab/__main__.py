import sys

from drrlab.cli import main

sys.exit(main())
