"""Run the finite-difference gradient suite and print one line per check."""

import sys

from aerodepth.verify import run_suite


def main(seed=1):
    results = run_suite(seed=seed, trials=10)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(int(sys.argv[1]) if len(sys.argv) > 1 else 1))
