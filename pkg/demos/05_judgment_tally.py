"""Aggregate blind pairwise listening-test votes into win/tie/loss tallies.

Each vote names the two systems compared and which one the judge preferred
(or TIE).  The tally is reported from one system's perspective, per
competitor and overall.
"""

from flowtts.evaluation import PairwiseVote, aggregate_tally

votes = []
votes += [PairwiseVote("ours", "system_x", "A")] * 161
votes += [PairwiseVote("ours", "system_x", "TIE")] * 19
votes += [PairwiseVote("ours", "system_x", "B")] * 20
# Order within a vote does not matter; outcome letters refer to positions.
votes += [PairwiseVote("system_y", "ours", "B")] * 122
votes += [PairwiseVote("system_y", "ours", "TIE")] * 40
votes += [PairwiseVote("system_y", "ours", "A")] * 38

report = aggregate_tally(votes, "ours")
print(f"{len(votes)} votes from 'ours' perspective:\n")
print(f"{'competitor':<12} {'wins':>5} {'ties':>5} {'losses':>7}")
for name, counts in report.per_competitor.items():
    print(f"{name:<12} {counts.wins:>5} {counts.ties:>5} {counts.losses:>7}")
print("-" * 31)
c = report.overall
print(f"{'overall':<12} {c.wins:>5} {c.ties:>5} {c.losses:>7}")
print(f"\nWin rate: {c.wins / c.total:.1%}, non-loss rate: {(c.wins + c.ties) / c.total:.1%}")
