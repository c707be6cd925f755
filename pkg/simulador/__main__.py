import sys

from simulador.main import main

sys.exit(main())
