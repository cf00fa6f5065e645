"""One busy ring, one idle ring, one learner on both; with and without skips."""

from mrpaxos.harness.experiments import merge_progress

for leveling in (True, False):
    r = merge_progress(leveling, rate=12000)
    print(f"rate leveling {'on ' if leveling else 'off'}: {r.deliveries:5d} deliveries, "
          f"longest gap {r.max_gap_ms:7.2f} ms (bound {r.bound_ms:.2f} ms) "
          f"-> {'ok' if r.ok else 'stalled'}")
