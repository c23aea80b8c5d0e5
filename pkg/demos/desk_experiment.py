"""Summarize one or more ``cmrt run-all`` directories as the three-way comparison.

    cmrt run-all --out runs/s0 --seed 0 --sweep
    python3 demos/desk_experiment.py runs/s0 [runs/s1 ...]

For each run: clean and attacked test BLEU per model, the drops that matter
(attack effect on the base model, FN gain over TR on attacked speech, clean
cost of each fine-tuning), the alignment and CKA analogs, and the KL sweep
if one was run.
"""
import csv
import json
import sys
from pathlib import Path

MODELS = ("base", "mixup-only", "tr", "fn", "advspeech")


def show(run: Path) -> None:
    s = json.loads((run / "analysis/summary.json").read_text())
    print(f"\n== {run}")
    print(f"  {'model':11s} {'clean':>7s} {'attacked':>9s} {'cosine':>7s} {'CKA/adv':>8s}")
    for m in MODELS:
        if m in s:
            r = s[m]
            print(f"  {m:11s} {r['clean-test']:7.2f} {r['adv-test']:9.2f} {r['mean_cosine']:7.3f}"
                  f" {r.get('cka_vs_advspeech', float('nan')):8.4f}")
    b, tr, fn, adv = s["base"], s["tr"], s["fn"], s["advspeech"]
    print(f"  attack effect on base      {b['adv-test'] - b['clean-test']:+.2f}")
    print(f"  FN - TR on attacked speech {fn['adv-test'] - tr['adv-test']:+.2f}")
    print(f"  clean cost: FN vs TR       {tr['clean-test'] - fn['clean-test']:+.2f}")
    print(f"  clean cost: advspeech vs base {b['clean-test'] - adv['clean-test']:+.2f}")
    fn_inputs = json.loads((run / "fn/manifest.json").read_text())["inputs"]
    print(f"  FN inputs: {sorted({e['kind'] for e in fn_inputs})}")
    sweep = run / "sweep/report.csv"
    if sweep.exists():
        clean = {}
        if (run / "sweep/report_clean.csv").exists():
            with open(run / "sweep/report_clean.csv") as fh:
                clean = {r["lambda_kl"]: float(r["bleu"]) for r in csv.DictReader(fh)}
        print("  KL sweep (lambda_kl: attacked / clean BLEU)")
        with open(sweep) as fh:
            for r in csv.DictReader(fh):
                print(f"    {float(r['lambda_kl']):5g}: {float(r['bleu']):6.2f} / {clean.get(r['lambda_kl'], float('nan')):6.2f}")


if __name__ == "__main__":
    if not sys.argv[1:]:
        sys.exit(__doc__)
    for arg in sys.argv[1:]:
        show(Path(arg))
