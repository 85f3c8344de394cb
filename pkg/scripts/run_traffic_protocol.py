"""Run the clean and adversarial protocol on a flow corpus for each traffic subset.

    python scripts/run_traffic_protocol.py --data data/iscx.arff --out results/iscx

ISCX-style class names (a ``VPN`` prefix marks tunnelled traffic) are split
into combined, VPN and NonVPN runs; other corpora run once as combined.
"""

import argparse
import json
import logging
from pathlib import Path

from trafficbench.evalbench import DataSource, ExperimentPlan, run_experiment
from trafficbench.flowdata import load_dataset

ISCX_TOP5 = {"duration", "max_fiat", "max_biat", "mean_fiat", "mean_biat"}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True, help="ARFF or CSV corpus")
    p.add_argument("--label-column", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-attack-samples", type=int, default=1000,
                   help="attacked test rows per subset (0 = all)")
    p.add_argument("--attacks", default="zoo,pgd,deepfool")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    ds = load_dataset(args.data, args.label_column)
    is_vpn = [c.lower().startswith("vpn") for c in ds.schema.class_names]
    has_vpn = any(is_vpn) and not all(is_vpn)
    selectors = ["combined", "vpn", "nonvpn"] if has_vpn else ["combined"]
    summary = {}
    for sel in selectors:
        plan = ExperimentPlan(
            dataset=DataSource(path=str(Path(args.data).resolve()), label_column=args.label_column,
                               selector=sel, name=f"{Path(args.data).stem}-{sel}"),
            attacks=tuple(a for a in args.attacks.split(",") if a),
            max_attack_samples=args.max_attack_samples or None,
            seed=args.seed,
        )
        result = run_experiment(plan, Path(args.out) / sel)
        top = result.manifest["selected_features"]
        summary[sel] = {
            "n_train": result.manifest["split"]["n_train"],
            "n_test": result.manifest["split"]["n_test"],
            "selected_features": top,
            "macro_f1": {f"{c.model}/{c.attack}": round(c.report.macro_f1, 6) for c in result.cells},
            "flags": result.flags,
        }
        if sel == "combined" and has_vpn:
            names = {n.replace("-", "_").lower() for n in top}
            summary[sel]["top5_matches_reference"] = names == ISCX_TOP5
    text = json.dumps(summary, indent=2)
    (Path(args.out) / "summary.json").write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
