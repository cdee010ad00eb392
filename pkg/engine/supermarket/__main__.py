from supermarket.main import main

raise SystemExit(main())
