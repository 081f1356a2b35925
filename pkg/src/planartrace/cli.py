"""Command-line entry point: ``planartrace <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .correction import correct_observations, error_series, solve_epochs
from .frames import ecef_to_enu
from .io import RunConfig, fmt, load_config
from .planar_map import PlanarMap, filter_by_height, spacing_stats

logger = logging.getLogger("planartrace")

# config keys that may be overridden by a flag of the same (dashed) name
_CONFIG_FLAGS = {
    "origin": str,
    "k": int,
    "min_slice_size": int,
    "premerge_min_size": int,
    "theta_merge_deg": float,
    "flatness_alpha": float,
    "street_width": float,
    "receiver_height": float,
    "elevation_mask_deg": float,
    "spacing_l": float,
    "reflection_policy": str,
    "seed": int,
    "workers": int,
}


class Outputs:
    """Files a command writes; removed again if the command fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def __call__(self, path) -> Path:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def discard(self) -> None:
        for p in self.paths:
            if p.exists():
                p.unlink()


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", help="key = value or JSON run configuration")
    for k in keys:
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=_CONFIG_FLAGS[k], default=None)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "height_band", None) is not None:
        over["height_band"] = tuple(args.height_band)
    return cfg.updated(**over)


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO,HI") from None
    return lo, hi


def _write_hist(path, hist) -> None:
    io.write_table(path, ["bin_lo", "bin_hi", "count", "fraction"], hist.rows())


# ------------------------------------------------------------------ commands


def cmd_segment(args, out: Outputs) -> int:
    from .pipeline import segment_cloud

    cfg = _config(args)
    pts = io.read_cloud(args.cloud)
    res = segment_cloud(pts, cfg)
    res.map.save(out(args.out))
    if args.labels:
        io.write_labels(out(args.labels), res.labels(len(pts)))
    if args.stats and res.spacing is not None:
        io.write_table(out(args.stats), ["statistic", "value_m"], res.spacing.rows())
    if args.figure:
        from .plotting import plot_map

        plot_map(res.map, out(args.figure), pts)
    print(f"facets={len(res.map)}")
    return 0


def _to_enu(table, origin):
    return table.transformed(lambda p: ecef_to_enu(p, origin))


def cmd_trace(args, out: Outputs) -> int:
    from .raytrace import trace_run

    cfg = _config(args)
    pmap = PlanarMap.load(args.map)
    origin = pmap.origin or cfg.frame_origin
    if args.height_band is not None:
        pmap = filter_by_height(pmap, cfg.height_band)
    sats = _to_enu(io.read_sats(args.sats), origin)
    route = _to_enu(io.read_route(args.route), origin)
    paths = trace_run(sats, route, pmap, cfg.reflection_policy, workers=cfg.workers)
    io.write_paths(out(args.out), paths)
    if args.figure:
        from .plotting import plot_delays

        plot_delays(paths, out(args.figure))
    counts = {}
    for p in paths:
        counts[p.classification.value] = counts.get(p.classification.value, 0) + 1
    print(" ".join(f"{k}={counts[k]}" for k in sorted(counts)))
    return 0


def _constellation(cfg: RunConfig):
    from .margins import synth_constellation

    return synth_constellation(cfg.frame_origin, mask_deg=cfg.elevation_mask_deg)


def _canyon(cfg: RunConfig):
    from .margins import CanyonConfig

    return CanyonConfig(cfg.street_width, (0.0, 0.0, cfg.receiver_height))


def cmd_simulate_heights(args, out: Outputs) -> int:
    from .margins import height_histogram

    cfg = _config(args)
    study = height_histogram(_constellation(cfg), _canyon(cfg), cfg.elevation_mask_deg, cfg.height_band)
    _write_hist(out(args.out), study.histogram)
    if args.figure:
        from .plotting import plot_histogram

        plot_histogram(study.histogram, out(args.figure), "reflection height (m)", band=cfg.height_band)
    print(f"samples={study.histogram.total} fraction_in_band={study.fraction_in_band:.4f}")
    return 0


def cmd_margins(args, out: Outputs) -> int:
    from .margins import margin_distributions

    cfg = _config(args)
    cons = _constellation(cfg)
    st = margin_distributions(cons, _canyon(cfg), cfg.spacing_l)
    _write_hist(out(args.out_translation), st.translation_hist)
    _write_hist(out(args.out_tilt), st.tilt_hist)
    if args.out_samples:
        header = [
            "epoch", "prn", "wall", "height_m",
            "e_minus_m", "e_plus_m", "e_max_formula_m",
            "theta_minus_deg", "theta_plus_deg", "theta_formula_deg",
        ]
        t, r = st.translation, st.tilt
        rows = (
            [
                cons.epoch[i], cons.prn[i], "+" if st.wall[k] > 0 else "-", st.heights[k],
                t.minus[k], t.plus[k], t.formula[k],
                math.degrees(r.minus[k]), math.degrees(r.plus[k]), math.degrees(r.formula[k]),
            ]
            for k, i in enumerate(st.sample.tolist())
        )
        io.write_table(out(args.out_samples), header, rows)
    if args.figure_translation or args.figure_tilt:
        from .plotting import plot_histogram

        if args.figure_translation:
            plot_histogram(st.translation_hist, out(args.figure_translation), "translation margin endpoint (m)")
        if args.figure_tilt:
            plot_histogram(st.tilt_hist, out(args.figure_tilt), "tilt margin endpoint (deg)")
    agree = st.agreement()
    logger.info("closed form vs oracle: %s", agree)
    print(
        f"samples={len(st.heights)} translation_within={st.translation_fraction:.4f} "
        f"tilt_within={st.tilt_fraction:.4f}"
    )
    return 0


def _write_fixes(path, fixes) -> None:
    io.write_table(
        path,
        ["epoch", "x", "y", "z", "bias", "n_sats", "converged"],
        ([f.epoch, *f.position.tolist(), f.clock_bias, f.n_sats, int(f.converged)] for f in fixes),
    )


def cmd_correct(args, out: Outputs) -> int:
    cfg = _config(args)
    obs = io.read_obs(args.obs)
    paths = io.read_paths(args.paths)
    sats = io.read_sats(args.sats)
    fixed, counts = correct_observations(obs, paths, args.los_nlos)
    logger.info("corrections: %s", dict(counts))
    fixes = solve_epochs(fixed, sats)
    _write_fixes(out(args.out_fixes), fixes)
    if args.truth:
        origin = cfg.frame_origin
        truth = _to_enu(io.read_route(args.truth), origin)
        series = {}
        for name, obs_used in (("uncorrected", obs), ("corrected", fixed)):
            fx = solve_epochs(obs_used, sats) if name == "uncorrected" else fixes
            for f in fx:
                f.position = ecef_to_enu(f.position, origin)
                f.frame = "enu"
            series[name] = error_series(fx, truth)
        s = series["corrected"]
        if args.out_errors:
            io.write_table(
                out(args.out_errors),
                ["epoch", "east_m", "north_m", "up_m", "horizontal_m", "error_3d_m"],
                ([e, *c.tolist(), h, d] for e, c, h, d in zip(s.epoch, s.components, s.horizontal, s.error_3d)),
            )
        if args.figure:
            from .plotting import plot_errors

            plot_errors(series, out(args.figure))
        for name, ser in series.items():
            sm = ser.summary()
            print(f"{name}: 3d_rms={sm['3d_rms']:.4f} horizontal_rms={sm['horizontal_rms']:.4f} n={sm['n']}")
    print(f"fixes={len(fixes)} corrected={counts['corrected']} dropped={counts['dropped']}")
    return 0


def cmd_synth(args, out: Outputs) -> int:
    from . import synth

    cfg = _config(args)
    d = Path(args.out_dir)
    if args.kind == "canyon":
        pts, truth = synth.generate_canyon(
            args.n_buildings, cfg.street_width, args.noise, args.density, cfg.seed, origin=cfg.frame_origin
        )
        io.write_cloud(out(d / "cloud.ply"), pts)
        io.write_labels(out(d / "labels.txt"), truth.labels)
        truth.save(out(d / "truth.json"))
        print(f"points={len(pts)} planes={len(truth.planes)}")
    else:
        scn = synth.nlos_scenario(
            n_epochs=args.epochs, street_width=cfg.street_width, receiver_height=cfg.receiver_height,
            noise_sigma=args.range_noise, seed=cfg.seed, origin=cfg.frame_origin,
        )
        cloud = synth.scenario_cloud(scn, args.density, args.noise, cfg.seed)
        io.write_cloud(out(d / "cloud.xyz"), cloud)
        scn.truth.save(out(d / "truth.json"))
        io.write_sats(out(d / "sats.csv"), scn.sats_ecef)
        io.write_route(out(d / "route.csv"), scn.route_ecef)
        io.write_obs(out(d / "obs.csv"), scn.obs)
        print(f"points={len(cloud)} epochs={len(scn.route_ecef)} injections={len(scn.truth.injections)}")
    return 0


def cmd_stats(args, out: Outputs) -> int:
    pts = io.read_cloud(args.cloud)
    labels = io.read_labels(args.labels)
    if len(labels) != len(pts):
        raise ValueError(f"{len(labels)} labels for {len(pts)} points")
    clusters = [pts[labels == c] for c in np.unique(labels[labels >= 0])]
    stats = spacing_stats(clusters)
    rows = stats.rows() + [("clusters", len(clusters))]
    target = out(args.out) if args.out else None
    if target is not None:
        io.write_table(target, ["statistic", "value_m"], rows)
    for k, v in rows:
        print(f"{k}={fmt(v)}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="planartrace", description="Planar-map GNSS NLOS ray tracing toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="point cloud to planar map")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, help="planar map JSON")
    p.add_argument("--labels", help="per-point facet labels")
    p.add_argument("--stats", help="spacing statistics table")
    p.add_argument("--figure")
    _add_config_flags(p, ["origin", "k", "min_slice_size", "premerge_min_size", "theta_merge_deg", "flatness_alpha"])
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("trace", help="classify satellite signals against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--sats", required=True, help="epoch,prn,x,y,z in ECEF")
    p.add_argument("--route", required=True, help="epoch,x,y,z in ECEF")
    p.add_argument("--out", required=True)
    p.add_argument("--height-band", type=_band, help="keep facets overlapping LO,HI m")
    p.add_argument("--figure")
    _add_config_flags(p, ["origin", "reflection_policy", "workers"])
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("simulate-heights", help="reflection height histogram over a constellation")
    p.add_argument("--out", required=True)
    p.add_argument("--height-band", type=_band)
    p.add_argument("--figure")
    _add_config_flags(p, ["origin", "street_width", "receiver_height", "elevation_mask_deg"])
    p.set_defaults(func=cmd_simulate_heights)

    p = sub.add_parser("margins", help="translation and tilt margin distributions")
    p.add_argument("--out-translation", required=True)
    p.add_argument("--out-tilt", required=True)
    p.add_argument("--out-samples")
    p.add_argument("--figure-translation")
    p.add_argument("--figure-tilt")
    _add_config_flags(p, ["origin", "street_width", "receiver_height", "elevation_mask_deg", "spacing_l"])
    p.set_defaults(func=cmd_margins)

    p = sub.add_parser("correct", help="apply delays and solve positions")
    p.add_argument("--obs", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--sats", required=True)
    p.add_argument("--truth", help="true route (ECEF) for error series")
    p.add_argument("--out-fixes", required=True)
    p.add_argument("--out-errors")
    p.add_argument("--los-nlos", choices=["keep", "drop"], default="keep")
    p.add_argument("--figure")
    _add_config_flags(p, ["origin"])
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("synth", help="synthetic scene and truth")
    p.add_argument("--kind", choices=["canyon", "nlos"], default="canyon")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-buildings", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.05, help="point noise sigma (m)")
    p.add_argument("--density", type=float, default=50.0, help="points per m^2")
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--range-noise", type=float, default=0.1, help="pseudorange noise sigma (m)")
    _add_config_flags(p, ["origin", "street_width", "receiver_height", "seed"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="nearest-neighbour spacing statistics per cluster")
    p.add_argument("--cloud", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        return args.func(args, out)
    except (ValueError, OSError, KeyError) as exc:
        out.discard()
        print(f"planartrace {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise


if __name__ == "__main__":
    sys.exit(main())
