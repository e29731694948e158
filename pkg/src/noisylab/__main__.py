from noisylab.cli import main

raise SystemExit(main())
