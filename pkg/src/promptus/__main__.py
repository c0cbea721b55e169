from promptus.cli import main

main()
