from riskgen.cli import main

main()
