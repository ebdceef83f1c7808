from trap.cli import main

main(prog_name="trap")
