"""Command-line entry points for the full pipeline.

Every command is idempotent under identical config + seed; failures exit
nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import experiments
from .config import load_config
from .errors import SliceNavError, ValidationError
from .slicer import Action, RenderConfig, render_slice
from .volumes import load_volume


def _fail(err: SliceNavError) -> None:
    sys.stderr.write(json.dumps(err.to_json()) + "\n")
    raise SystemExit(2)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SliceNavError as e:
        _fail(e)


def _cfg(path: str):
    return _guard(load_config, path)


@click.group()
def main():
    """Volume-to-slice-trajectory world-model pretraining toolkit."""


@main.command("gen-data")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
def gen_data(config_path):
    """Generate the phantom trajectory dataset."""
    cfg = _cfg(config_path)
    path = _guard(experiments.generate_dataset, cfg)
    click.echo(f"dataset written to {path}")


@main.command("pretrain-tokenizer")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
def pretrain_tokenizer(config_path):
    """Stage-1: masked-patch tokenizer pretraining."""
    cfg = _cfg(config_path)
    tok = _guard(experiments.pretrain_tokenizer, cfg)
    losses = [h["L_token"] for h in tok.history_ if "L_token" in h]
    click.echo(f"tokenizer trained: {len(losses)} steps, "
               f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")


@main.command("pretrain-dynamics")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--action-mode", type=click.Choice(["real", "zero"]), default="real")
def pretrain_dynamics(config_path, action_mode):
    """Stage-2: action-conditioned latent dynamics pretraining."""
    cfg = _cfg(config_path)

    def run():
        from .tokenizer import SliceTokenizer
        tok_dir = Path(cfg.out_dir) / "tokenizer"
        if not (tok_dir / "ckpt.meta.json").exists():
            from .errors import ConfigError
            raise ConfigError(f"missing tokenizer checkpoint under {tok_dir}",
                              code="missing_backbone")
        tok = SliceTokenizer.load(tok_dir / "ckpt")
        return experiments.pretrain_dynamics(cfg, tok, action_mode=action_mode)

    dyn = _guard(run)
    losses = [h["L_emp"] for h in dyn.history_ if "L_emp" in h]
    click.echo(f"dynamics({action_mode}) trained: {len(losses)} steps, "
               f"L_emp {losses[0]:.4f} -> {losses[-1]:.4f}")


@main.command("probe")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--task", type=click.Choice(["region_seg", "tissue_seg", "coord_field"]),
              default="coord_field")
@click.option("--k", type=int, default=None)
@click.option("--backbone", "method",
              type=click.Choice(["tokenizer_only", "no_action_dyn", "action_cond_dyn"]),
              default="action_cond_dyn")
def probe(config_path, task, k, method):
    """Train a frozen-feature probe head and report metrics."""
    cfg = _cfg(config_path)
    result = _guard(experiments.run_probe, cfg, task, k, method)
    click.echo(json.dumps({"task": task, "val_curve": result["val_curve"],
                           "test": result["test"]}, indent=1, default=str))


@main.command("compare")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
def compare(config_path):
    """Method-comparison grid (epochs x methods x tasks)."""
    cfg = _cfg(config_path)
    table = _guard(experiments.run_compare, cfg)
    from .report import comparison_table_text
    click.echo(comparison_table_text(table))


@main.command("sweep-context")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
def sweep_context(config_path):
    """Context-length sweep with latency/memory columns."""
    cfg = _cfg(config_path)
    table = _guard(experiments.run_sweep, cfg)
    from .report import sweep_table_text
    click.echo(sweep_table_text(table))


@main.command("diagnose")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
def diagnose(config_path):
    """Action-use diagnostics from the dynamics training logs."""
    cfg = _cfg(config_path)
    summary = _guard(experiments.run_diagnose, cfg)
    click.echo(json.dumps(summary["verdict"], indent=1))


@main.command("render")
@click.option("--volume", "volume_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["rawv", "nifti1"]), default="rawv")
@click.option("--action", "action_csv", default="0,0,0,0,0,0,0,0",
              help="8 comma-separated components in [-1,1]")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--size", default="64x64", help="output HxW")
@click.option("--png", "png_path", default=None, type=click.Path())
def render(volume_path, fmt, action_csv, out_path, size, png_path):
    """Render a single oriented slice from a volume (Fig-style re-render)."""
    def run():
        vol = load_volume(volume_path, fmt)
        parts = [float(v) for v in action_csv.split(",")]
        action = Action.from_array(np.asarray(parts))
        try:
            h, w = (int(v) for v in size.lower().split("x"))
        except ValueError as e:
            raise ValidationError(f"bad --size {size!r}, expected HxW") from e
        frame = render_slice(vol, action, RenderConfig(out_h=h, out_w=w))
        np.savez(out_path, pixels=frame.pixels, valid=frame.valid,
                 action=action.as_array())
        if png_path:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
            plt.imsave(png_path, frame.pixels, cmap="gray", vmin=0.0, vmax=1.0)
        return frame

    frame = _guard(run)
    click.echo(f"rendered {frame.pixels.shape[0]}x{frame.pixels.shape[1]} slice, "
               f"{int(frame.valid.sum())} valid pixels -> {out_path}")


@main.command("serve")
@click.option("-c", "--config", "config_path", required=True, type=click.Path())
@click.option("--bind", default="127.0.0.1:8787", help="host:port")
@click.option("--ui", "ui_dir", default=None, type=click.Path(),
              help="static directory for the recorder UI")
def serve(config_path, bind, ui_dir):
    """Run the localhost render/record service."""
    cfg = _cfg(config_path)

    def run():
        from .server import RenderService, serve_forever
        from .volumes import load_volume as lv
        dataset_dir = Path(cfg.out_dir) / "dataset" / "volumes"
        volumes = {}
        if dataset_dir.exists():
            for path in sorted(dataset_dir.glob("*.rawv")):
                if ".region." in path.name or ".tissue." in path.name:
                    continue
                volumes[path.name.removesuffix(".rawv")] = lv(path, "rawv")
        if not volumes:
            from .errors import ConfigError
            raise ConfigError(f"no volumes under {dataset_dir}; run gen-data first",
                              code="missing_dataset")
        host, _, port = bind.partition(":")
        service = RenderService(volumes, experiments.render_config(cfg),
                                Path(cfg.out_dir) / "recordings", ui_dir)
        click.echo(f"serving {len(volumes)} volumes on http://{bind}")
        serve_forever(service, host, int(port or 8787))

    _guard(run)


if __name__ == "__main__":
    main()
