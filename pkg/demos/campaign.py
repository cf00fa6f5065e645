"""Random crash/restart scenarios through the trace checkers.

usage: python demos/campaign.py [first_seed] [count]
"""

import sys

from mrpaxos.harness.scenario import random_scenario, run_scenario

first = int(sys.argv[1]) if len(sys.argv) > 1 else 0
count = int(sys.argv[2]) if len(sys.argv) > 2 else 20
bad = 0
for seed in range(first, first + count):
    sc = random_scenario(seed)
    rep = run_scenario(sc).report
    bad += not rep.ok
    print(f"seed {seed:4d} rings {len(sc.config.rings)} {rep}")
print(f"{count - bad}/{count} clean")
sys.exit(1 if bad else 0)
