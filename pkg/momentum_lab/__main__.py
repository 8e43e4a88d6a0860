from momentum_lab.cli import main

raise SystemExit(main())
