import sys

from lsmaudit.cli import main

sys.exit(main())
