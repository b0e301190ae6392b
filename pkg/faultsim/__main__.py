from faultsim.cli import main

raise SystemExit(main())
