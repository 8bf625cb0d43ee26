from sectionalmoe.cli import main


raise SystemExit(main())
