import sys

from embanet.cli import main

sys.exit(main())
