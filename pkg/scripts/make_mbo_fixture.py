"""Write tests/fixtures/mbo_session.csv: a synthetic MBO session in vendor CSV layout.

Rows come from the table1 synthetic generator. Events with no MBO action are
written with action ``R``; every 500th row has its size zeroed. Both kinds are
dropped (and counted) by ``lobbyte convert``.
"""
import csv
import sys
from pathlib import Path

from lobbyte.codec import event_codes, order_ids, side_of
from lobbyte.ingest import SyntheticConfig, synth_generate

LETTER = {10: "A", 11: "C", 12: "M", 13: "F"}


def write_fixture(path, n_events=4000, seed=11):
    s = synth_generate(SyntheticConfig.table1(seed=seed, n_events=n_events)).events
    codes, oids, sides = event_codes(s), order_ids(s), side_of(s)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ts_event", "action", "side", "price", "size", "order_id"])
        for i in range(len(s)):
            size = 0.0 if i % 500 == 499 else float(s["quantity"][i])
            side = {1: "B", -1: "A"}.get(int(sides[i]), "N")
            w.writerow([int(s["exch_ts"][i]), LETTER.get(int(codes[i]), "R"), side,
                        repr(float(s["price"][i])), repr(size), int(oids[i])])


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "tests/fixtures/mbo_session.csv"
    write_fixture(out)
    print(out)
