from mixmask.cli import main

main()
