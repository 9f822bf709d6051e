#!/usr/bin/env python3
"""Run the full evaluation protocol from an experiment config and write reports.

Trains every protocol cell (supervised baseline, episodic model), evaluates
baseline and adapted variants on shared episode streams, and writes
results.csv, results.json, and run-manifest.json to the output directory.
The run is a pure function of (config, seed): repeating it reproduces the
CSV byte for byte.
"""
import argparse

from evofa.harness import load_experiment_config, run_protocol, write_run_manifest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True, help="experiment config JSON")
    ap.add_argument("--out", required=True, help="directory for results and manifest")
    args = ap.parse_args()

    cfg = load_experiment_config(args.config)
    table = run_protocol(cfg)
    csv_path, json_path = table.write(args.out)
    write_run_manifest(args.out, cfg)

    for row in table.rows:
        if row.subject == "all":
            print(
                f"{row.method} {row.shots}-shot: "
                f"{row.mean_accuracy:.4f} +/- {row.std_accuracy:.4f}"
            )
    print(f"results: {csv_path}")
    print(f"         {json_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
