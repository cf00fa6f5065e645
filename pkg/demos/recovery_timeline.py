"""Kill a replica under load, restart it, and print throughput per second.

Runs in the simulator with the DESK CPU profile, so the numbers are virtual
ops/s.  Takes about half a minute.
"""

from mrpaxos.harness.experiments import recovery_timeline

r = recovery_timeline()
print(f"peak {r.peak:.0f} ops/s, offered {r.rate:.0f} ops/s, replica {r.victim} "
      f"killed at 2 s, restarted at 10 s")
for second, ops in r.throughput_series():
    print(f"{second:3d} {ops:6d} {'#' * (ops // 100)}")
print(f"recovered from {r.recovered_from}; {r.answered}/{r.issued} answered; "
      f"states equal: {r.equal_state}")
