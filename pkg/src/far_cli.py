# Licensed to the Apache Software Foundation (ASF) under one
# or more contributor license agreements.  See the NOTICE file
# distributed with this work for additional information
# regarding copyright ownership.  The ASF licenses this file
# to you under the Apache License, Version 2.0 (the
# "License"); you may not use this file except in compliance
# with the License.  You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing,
# software distributed under the License is distributed on an
# "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
# KIND, either express or implied.  See the License for the
# specific language governing permissions and limitations
# under the License.

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from far_config import FarConfig, LOG_DEST_STDERR, LOG_DEST_STDOUT
from far_denoising import NoiseForm
from far_detector_sim import FrameDetections, simulate_2d_detector
from far_errors import FarError
from far_invariants import CheckRunner, InvariantCheckFactory
from far_pipeline import PipelineResult, PipelineVariant, VariantKind, run_pipeline
from far_report import emit_report, write_jsonl
from far_scene import SceneConfig, gen_scene

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2

VARIANT_PARAMS = {"n_global": int, "tau": float, "extra_global": int, "use_gt_depth": None}
DENOISE_PARAMS = {"denoise_form": NoiseForm, "negatives_per_group": int}
SWEEP_HEADER = [
    "param",
    "value",
    "seed",
    "variant",
    "band",
    "threshold",
    "coverage_recall",
    "recall",
    "ap",
    "recall_2d",
]


class UsageError(Exception):
    pass


class FarArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def setup_logging(config: FarConfig):
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    supported_log_streams = {
        LOG_DEST_STDOUT: sys.stdout,
        LOG_DEST_STDERR: sys.stderr,
    }
    if config.log_stream not in supported_log_streams.keys():
        err = f"Unsupported log stream {config.log_stream}, supported: {','.join(supported_log_streams.keys())}"
        raise ValueError(err)

    logging.basicConfig(
        stream=supported_log_streams.pop(config.log_stream),
        format=log_format,
        level=logging.getLevelName(config.log_level),
    )


def parse_bool(value: str) -> bool:
    if value in ("true", "1"):
        return True
    if value in ("false", "0"):
        return False
    raise UsageError(f"'{value}' is not a boolean, use true or false")


def parse_sweep_param(spec: str) -> tuple[str, list]:
    """Parses name=v1,v2,... into the parameter name and its typed values"""
    if "=" not in spec:
        raise UsageError(f"Sweep parameter '{spec}' must look like name=v1,v2")
    name, raw = spec.split("=", 1)
    name = name.strip()
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise UsageError(f"Sweep parameter '{name}' has no values")
    if name in VARIANT_PARAMS:
        cast = VARIANT_PARAMS[name]
    elif name in DENOISE_PARAMS:
        cast = DENOISE_PARAMS[name]
    else:
        supported = ",".join(list(VARIANT_PARAMS) + list(DENOISE_PARAMS))
        raise UsageError(f"Unsupported sweep parameter '{name}', supported: {supported}")
    try:
        return name, [parse_bool(v) if cast is None else cast(v) for v in values]
    except ValueError as e:
        raise UsageError(f"Invalid value for '{name}': {e}")


def parse_seeds(value: str) -> list[int]:
    """'N' means seeds 0..N-1, 'a,b,c' lists them"""
    try:
        if "," in value:
            return [int(v) for v in value.split(",") if v.strip()]
        return list(range(int(value)))
    except ValueError:
        raise UsageError(f"Invalid seeds '{value}'")


def apply_setting(cfg: SceneConfig, variant: PipelineVariant, name: str, value):
    if name in VARIANT_PARAMS:
        return cfg, replace(variant, **{name: value})
    if name == "denoise_form":
        return replace(cfg, denoise=replace(cfg.denoise, form=value)), variant
    return replace(cfg, denoise=replace(cfg.denoise, negatives_per_group=value)), variant


class FarCli:
    def __init__(self, config: FarConfig):
        self.__log = logging.getLogger(FarCli.__name__)
        self.__config = config

    def run(self, args) -> int:
        cfg = self.__load_config(args.config, args.seed)
        variant = PipelineVariant(
            VariantKind(args.variant),
            n_global=args.n_global,
            tau=args.tau,
            use_gt_depth=args.use_gt_depth,
            extra_global=args.extra_global,
        )
        scene_log = self.__config.scene_logger(self.__log, cfg.seed)
        scene_log.info("Simulating %d frame(s) with variant %s", cfg.frames, variant.kind.value)
        scene = gen_scene(cfg)
        detections = simulate_2d_detector(scene)
        result = run_pipeline(scene, variant, cfg, detections)
        written = emit_report(result.report, args.out, self.__config.report_formats)
        diagnostics_path = os.path.join(args.out, "diagnostics.json")
        with open(diagnostics_path, "w") as f:
            json.dump(result.diagnostics.to_dict(), f, sort_keys=True, indent=2)
        written.append(diagnostics_path)
        written += self.__write_frames(args.out, detections, result)
        scene_log.info("Wrote %s", ", ".join(written))
        return EXIT_OK

    @staticmethod
    def __write_frames(out: str, detections: list[FrameDetections], result: PipelineResult) -> list[str]:
        """One JSON line per detection, query and prediction, tagged with its frame index"""
        return [
            write_jsonl(
                os.path.join(out, "detections.jsonl"),
                (dict(det.to_dict(), frame=i) for i, frame in enumerate(detections) for det in frame.detections),
            ),
            write_jsonl(
                os.path.join(out, "queries.jsonl"),
                (dict(q.to_dict(), frame=i) for i, queries in enumerate(result.queries) for q in queries),
            ),
            write_jsonl(
                os.path.join(out, "predictions.jsonl"),
                (dict(p.to_dict(), frame=i) for i, preds in enumerate(result.predictions) for p in preds),
            ),
        ]

    def sweep(self, args) -> int:
        base = self.__load_config(args.config, None)
        params = [parse_sweep_param(p) for p in args.param]
        seeds = parse_seeds(args.seeds)
        variants = [VariantKind(v) for v in (args.variant or [k.value for k in VariantKind])]
        names = [name for name, _ in params]
        combos = list(itertools.product(*[values for _, values in params]))
        self.__log.info(
            "Sweeping %s over %d seed(s) and %d variant(s) with %d thread(s)",
            ", ".join(names) or "nothing",
            len(seeds),
            len(variants),
            self.__config.threads,
        )

        def run_seed(seed: int) -> list[list]:
            cfg = base.with_seed(seed)
            scene = gen_scene(cfg)
            detections = simulate_2d_detector(scene)
            rows = []
            for combo in combos:
                for kind in variants:
                    run_cfg, variant = cfg, PipelineVariant(kind)
                    for name, value in zip(names, combo):
                        run_cfg, variant = apply_setting(run_cfg, variant, name, value)
                    result = run_pipeline(scene, variant, run_cfg, detections)
                    label = ";".join(names)
                    value_label = ";".join(str(v.value if isinstance(v, NoiseForm) else v) for v in combo)
                    for band in result.report.bands:
                        recall_2d = result.diagnostics.recall_2d.get(band.band)
                        for t in band.thresholds:
                            rows.append(
                                [label, value_label, seed, kind.value, band.band, t.threshold]
                                + [t.coverage_recall, t.recall, t.ap, recall_2d]
                            )
            self.__config.scene_logger(self.__log, seed).info("Finished %d run(s)", len(combos) * len(variants))
            return rows

        with ThreadPoolExecutor(max_workers=self.__config.threads) as executor:
            rows = [row for seed_rows in executor.map(run_seed, seeds) for row in seed_rows]

        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(SWEEP_HEADER)
            writer.writerows([["" if v is None else v for v in row] for row in rows])
        with open(os.path.join(args.out, "sweep.json"), "w") as f:
            json.dump([dict(zip(SWEEP_HEADER, row)) for row in rows], f, sort_keys=True, indent=2)
        self.__log.info("Wrote %d sweep rows to %s", len(rows), args.out)
        return EXIT_OK

    def check(self, args) -> int:
        checks = InvariantCheckFactory(self.__config).create_checks(args.only)
        outcomes = CheckRunner(checks).run()
        failed = [check_id for check_id, outcome in outcomes.items() if not outcome.passed and not outcome.advisory]
        advisory = [check_id for check_id, outcome in outcomes.items() if not outcome.passed and outcome.advisory]
        if advisory:
            self.__log.warning("Advisory checks did not hold: %s", ", ".join(advisory))
        if failed:
            self.__log.error("Failed checks: %s", ", ".join(failed))
            return EXIT_CHECK_FAILED
        self.__log.info("%d of %d checks passed", len(outcomes) - len(advisory), len(outcomes))
        return EXIT_OK

    def __load_config(self, path: str | None, seed: int | None) -> SceneConfig:
        cfg = SceneConfig.from_file(path) if path else SceneConfig()
        return cfg.with_seed(seed) if seed is not None else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = FarArgumentParser(prog="far", description="Long-range surround-view query simulator")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=FarArgumentParser)

    run = commands.add_parser("run", help="simulate one scene and write its metrics report")
    run.add_argument("--config", type=str, help="scene config JSON, defaults apply when omitted")
    run.add_argument(
        "--variant", choices=[k.value for k in VariantKind], default=VariantKind.ADAPTIVE_PLUS_GLOBAL.value
    )
    run.add_argument("--seed", type=int, help="overrides the seed of the scene config")
    run.add_argument("--out", type=str, required=True, help="output directory")
    run.add_argument("--n-global", dest="n_global", type=int, default=644)
    run.add_argument("--extra-global", dest="extra_global", type=int, default=0)
    run.add_argument("--tau", type=float, help="proposal score threshold, scene config value when omitted")
    run.add_argument("--use-gt-depth", dest="use_gt_depth", action="store_true")

    sweep = commands.add_parser("sweep", help="run variants over parameter values and seeds")
    sweep.add_argument("--config", type=str)
    sweep.add_argument("--param", action="append", default=[], help="name=v1,v2,... (repeatable)")
    sweep.add_argument("--seeds", type=str, default="10", help="N for seeds 0..N-1, or a comma list")
    sweep.add_argument("--variant", action="append", choices=[k.value for k in VariantKind])
    sweep.add_argument("--out", type=str, required=True)

    check = commands.add_parser("check", help="run the invariant suite")
    check.add_argument("--only", action="append", help="check id to run (repeatable)")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        config = FarConfig.from_env()
        setup_logging(config)
    except Exception as e:
        print(f"Error setting up logging: {e}", file=sys.stderr)
        return EXIT_USAGE

    log = logging.getLogger("far")
    try:
        args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
        cli = FarCli(config)
        if args.command == "run":
            return cli.run(args)
        if args.command == "sweep":
            return cli.sweep(args)
        return cli.check(args)
    except (UsageError, FarError, ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
