from fcox.cli import main

raise SystemExit(main())
