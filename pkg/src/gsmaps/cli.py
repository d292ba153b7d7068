"""``gsmaps`` command line: build shells, sample, render, animate, fit, edit, bench.

Exit codes: 0 success, 1 error, 2 success with warnings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from . import _backend
from .articulation import Pose, load_pose_sequence
from .avatar import GaussianAvatar
from .config import ConfigError, ProjectConfig, load_config
from .mesh import ShellStack, build_shell_stack, check_shell_separation, load_rig_bundle
from .optimize import FitConfig, compute_s_ref, fit, initial_textures, write_trace_csv
from .render import Camera, RenderOptions, SplatScene, default_camera, load_cameras, render, render_reference
from .render.imageio import load_gsim, load_png, psnr, save_gsim, save_png
from .shellmap import GaussianAnchors, ShellTextureStack, region_from_parts, sample_gaussians, swap_region
from .template import load_template

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2


class CommandWarning(Exception):
    """Raised after a command finished its outputs but has something to flag."""


def _csv_ints(text: Optional[str]):
    if text is None:
        return None
    return tuple(int(t) for t in text.split(",") if t.strip())


def _csv_floats(text: Optional[str]):
    if text is None:
        return None
    vals = tuple(float(t) for t in text.split(",") if t.strip())
    if len(vals) != 3:
        raise click.BadParameter("expected three comma-separated numbers")
    return vals


def _config(ctx, **overrides) -> ProjectConfig:
    cfg = load_config(ctx.obj.get("config"))
    if ctx.obj.get("output"):
        cfg = cfg.with_overrides("paths", output=ctx.obj["output"])
    for section, values in overrides.items():
        cfg = cfg.with_overrides(section, **values)
    Path(cfg.paths.output).mkdir(parents=True, exist_ok=True)
    return cfg


def _need(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _rig(cfg: ProjectConfig):
    if cfg.paths.rig:
        return load_rig_bundle(_need(Path(cfg.paths.rig), "rig bundle"))
    return load_template()


def _threads(cfg: ProjectConfig) -> Optional[int]:
    return cfg.render.threads or None


def _avatar(cfg: ProjectConfig) -> GaussianAvatar:
    rig = _rig(cfg)
    stack = ShellStack.load(_need(cfg.section_path("shells", "shells.npz"), "shell stack"))
    anchors = GaussianAnchors.load(_need(cfg.section_path("anchors", "anchors.npz"), "anchors"))
    textures = ShellTextureStack.load(_need(cfg.section_path("textures", "textures.gstx"), "texture stack"))
    return GaussianAvatar(rig, stack, anchors, textures)


def _cameras(cfg: ProjectConfig, avatar_or_vertices) -> List[Camera]:
    if cfg.paths.cameras:
        return load_cameras(_need(Path(cfg.paths.cameras), "camera file"))
    verts = avatar_or_vertices
    if isinstance(verts, GaussianAvatar):
        verts = verts.stack.vertex_array().reshape(-1, 3)
    return [default_camera(verts, cfg.render.width, cfg.render.height)]


def _write_image(out: Path, color, alpha, gsim: bool) -> None:
    save_png(out.with_suffix(".png"), color, alpha)
    if gsim:
        save_gsim(out.with_suffix(".gsim"), np.concatenate([color, alpha[..., None]], -1))


def _render_views(avatar: GaussianAvatar, cfg: ProjectConfig, cameras, pose: Optional[Pose], stem: Path,
                  per_shell: bool, gsim: bool) -> List[Path]:
    scene, _ = avatar.scene(pose)
    written = []
    shells = cfg.render.shell_filter
    groups = [(None, None)]
    if shells:
        groups = [(f"_shell{k}", frozenset([k])) for k in shells] if per_shell else [("", frozenset(shells))]
    for ci, cam in enumerate(cameras):
        cam_tag = f"_cam{ci}" if len(cameras) > 1 else ""
        for tag, filt in groups:
            opts = RenderOptions(alpha_only=cfg.render.alpha_only, shell_filter=filt, threads=_threads(cfg))
            out = render(cam, scene, cfg.render.background, opts)
            path = stem.parent / f"{stem.name}{cam_tag}{tag or ''}"
            _write_image(path, out.color, out.alpha, gsim)
            written.append(path.with_suffix(".png"))
    return written


@click.group()
@click.option("-c", "--config", "config_path", type=click.Path(), help="Project INI file.")
@click.option("-o", "--output", type=click.Path(), help="Output directory (overrides [paths] output).")
@click.pass_context
def cli(ctx, config_path, output):
    """Articulable Gaussian avatars on mesh shells."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["output"] = output


@cli.command("build-shells")
@click.option("--rig", type=click.Path(), help="Rig bundle JSON (default: shipped template).")
@click.option("--n-shells", type=int)
@click.option("--offset", "adjacent_offset", type=float, help="Offset between adjacent shells (mesh units).")
@click.pass_context
def build_shells_cmd(ctx, rig, n_shells, adjacent_offset):
    """Build the shell stack and write a separation report."""
    cfg = _config(ctx, paths={"rig": rig}, representation={"n_shells": n_shells, "adjacent_offset": adjacent_offset})
    r = cfg.representation
    stack = build_shell_stack(_rig(cfg), r.n_shells, r.adjacent_offset)
    path = cfg.section_path("shells", "shells.npz")
    stack.save(path)
    report = check_shell_separation(stack)
    Path(cfg.paths.output, "separation_report.txt").write_text(report.summary() + "\n")
    click.echo(f"wrote {path} ({stack.n_shells} shells)")
    click.echo(report.summary())
    if report.flag_count:
        raise CommandWarning(f"{report.flag_count} vertices with inverted shell order")


@cli.command("sample")
@click.option("--count", "gaussian_count", type=int, help="Total Gaussians.")
@click.option("--seed", type=int)
@click.option("--texture-size", nargs=2, type=int, help="Texture height and width.")
@click.pass_context
def sample_cmd(ctx, gaussian_count, seed, texture_size):
    """Sample Gaussian anchors and write an initialized texture stack."""
    size = {"texture_height": texture_size[0], "texture_width": texture_size[1]} if texture_size else {}
    cfg = _config(ctx, representation={"gaussian_count": gaussian_count, "seed": seed, **size})
    r = cfg.representation
    rig = _rig(cfg)
    stack = ShellStack.load(_need(cfg.section_path("shells", "shells.npz"), "shell stack"))
    anchors = sample_gaussians(stack, r.gaussian_count, r.seed)
    anchors.save(cfg.section_path("anchors", "anchors.npz"))
    s_ref = compute_s_ref(anchors.positions(stack.vertex_array(), stack.faces))
    tex = initial_textures(stack, r.texture_height, r.texture_width, s_ref, rig)
    tex.save(cfg.section_path("textures", "textures.gstx"))
    click.echo(f"sampled {len(anchors)} Gaussians on {stack.n_shells} shells, s_ref = {s_ref:.6f}")


def _render_options(f):
    f = click.option("--camera", "cameras", type=click.Path(), help="Camera JSON file.")(f)
    f = click.option("--alpha-only", is_flag=True, default=None, help="Foreground mask rendering.")(f)
    f = click.option("--shell-filter", help="Comma-separated shell indices.")(f)
    f = click.option("--background", help="Background as r,g,b in [0, 1].")(f)
    f = click.option("--size", nargs=2, type=int, help="Width and height for the default camera.")(f)
    f = click.option("--threads", type=int)(f)
    f = click.option("--gsim", is_flag=True, help="Also write raw float GSIM images.")(f)
    return f


def _render_config(ctx, cameras, alpha_only, shell_filter, background, size, threads):
    size = {"width": size[0], "height": size[1]} if size else {}
    return _config(ctx, paths={"cameras": cameras},
                   render={"alpha_only": alpha_only, "shell_filter": _csv_ints(shell_filter),
                           "background": _csv_floats(background), "threads": threads, **size})


@cli.command("render")
@_render_options
@click.option("--pose", type=click.Path(), help="Pose sequence JSON; renders one frame.")
@click.option("--frame", type=int, default=0, show_default=True)
@click.option("--combined", is_flag=True, help="With a shell filter, render the selection as one image.")
@click.option("--name", default="render", show_default=True, help="Output file stem.")
@click.pass_context
def render_cmd(ctx, cameras, alpha_only, shell_filter, background, size, threads, gsim, pose, frame, combined,
               name):
    """Render color + alpha images (one per selected shell with --shell-filter)."""
    cfg = _render_config(ctx, cameras, alpha_only, shell_filter, background, size, threads)
    avatar = _avatar(cfg)
    p = None
    if pose:
        poses = load_pose_sequence(_need(Path(pose), "pose sequence"), avatar.rig)
        if not 0 <= frame < len(poses):
            raise IndexError(f"frame {frame} out of range for {len(poses)} frames")
        p = poses[frame]
    written = _render_views(avatar, cfg, _cameras(cfg, avatar), p, Path(cfg.paths.output) / name,
                            per_shell=not combined, gsim=gsim)
    for w in written:
        click.echo(f"wrote {w}")


@cli.command("animate")
@_render_options
@click.option("--poses", type=click.Path(), help="Pose sequence JSON (default: [paths] poses).")
@click.pass_context
def animate_cmd(ctx, cameras, alpha_only, shell_filter, background, size, threads, gsim, poses):
    """Render one numbered frame per pose."""
    cfg = _render_config(ctx, cameras, alpha_only, shell_filter, background, size, threads)
    cfg = cfg.with_overrides("paths", poses=poses)
    if not cfg.paths.poses:
        raise click.UsageError("no pose sequence given (--poses or [paths] poses)")
    avatar = _avatar(cfg)
    seq = load_pose_sequence(_need(Path(cfg.paths.poses), "pose sequence"), avatar.rig)
    cams = _cameras(cfg, avatar)
    digits = max(4, len(str(len(seq) - 1)))
    for k, pose in enumerate(seq):
        _render_views(avatar, cfg, cams, pose, Path(cfg.paths.output) / f"frame_{k:0{digits}d}",
                      per_shell=False, gsim=gsim)
    click.echo(f"wrote {len(seq)} frames to {cfg.paths.output}")


def load_target(path: Path):
    """(color, alpha) from a PNG or a 4-channel GSIM file."""
    if path.suffix.lower() == ".gsim":
        img = load_gsim(path)
        if img.shape[2] != 4:
            raise ValueError(f"{path}: target GSIM needs 4 channels (RGB + alpha), got {img.shape[2]}")
        return img[..., :3], img[..., 3]
    return load_png(path)


@cli.command("fit")
@click.option("--targets", help="Comma-separated target images, one per camera.")
@click.option("--camera", "cameras", type=click.Path(), help="Camera JSON file listing the target views.")
@click.option("--iterations", type=int)
@click.option("--lr", type=float)
@click.option("--log-interval", type=int)
@click.option("--threads", type=int)
@click.pass_context
def fit_cmd(ctx, targets, cameras, iterations, lr, log_interval, threads):
    """Fit the texture stack to target images; writes fitted.gstx, loss_trace.csv and checkpoints.

    Starts from the project's texture stack if it exists, else from a freshly initialized one.
    """
    cfg = _config(ctx, paths={"targets": targets, "cameras": cameras}, render={"threads": threads},
                  fit={"iterations": iterations, "lr": lr, "log_interval": log_interval})
    if not cfg.paths.targets:
        raise click.UsageError("no targets given (--targets or [paths] targets)")
    if not cfg.paths.cameras:
        raise click.UsageError("no cameras given (--camera or [paths] cameras)")
    target_paths = [Path(t.strip()) for t in cfg.paths.targets.split(",") if t.strip()]
    cams = load_cameras(_need(Path(cfg.paths.cameras), "camera file"))
    if len(cams) != len(target_paths):
        raise ValueError(f"{len(cams)} cameras but {len(target_paths)} targets")
    tgts = [load_target(_need(p, "target image")) for p in target_paths]
    for cam, (color, _), p in zip(cams, tgts, target_paths):
        if color.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{p}: size {color.shape[1]}x{color.shape[0]} does not match camera "
                             f"{cam.width}x{cam.height}")
    rig = _rig(cfg)
    stack = ShellStack.load(_need(cfg.section_path("shells", "shells.npz"), "shell stack"))
    anchors = GaussianAnchors.load(_need(cfg.section_path("anchors", "anchors.npz"), "anchors"))
    r, f = cfg.representation, cfg.fit
    fc = FitConfig(cams, tgts, iterations=f.iterations, lr=f.lr, betas=(f.beta1, f.beta2), lambda_s=f.lambda_s,
                   lambda_m=f.lambda_m, background=cfg.render.background, batch_size=f.batch_size or None,
                   seed=f.seed, log_interval=f.log_interval, threads=_threads(cfg))
    out = Path(cfg.paths.output)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def checkpoint(it, tex, row):
        tex.save(ckpt / f"iter_{it:06d}.gstx")
        click.echo(f"iter {it}: photometric {row[1]:.6f} scaling_reg {row[2]:.6f} total {row[3]:.6f}")

    # start from the project's texture stack when there is one
    tex_path = cfg.section_path("textures", "textures.gstx")
    start = ShellTextureStack.load(tex_path) if tex_path.exists() else None
    res = fit(rig, stack, anchors, fc, textures=start, texture_size=(r.texture_height, r.texture_width),
              callback=checkpoint)
    res.textures.save(out / "fitted.gstx")
    write_trace_csv(res.trace, out / "loss_trace.csv")
    avatar = GaussianAvatar(rig, stack, anchors, res.textures)
    scene, _ = avatar.scene()
    for k, (cam, (color, _)) in enumerate(zip(cams, tgts)):
        img = render(cam, scene, cfg.render.background, RenderOptions(threads=_threads(cfg))).color
        click.echo(f"view {k}: PSNR {psnr(img, color):.2f} dB")
    click.echo(f"wrote {out / 'fitted.gstx'} and {out / 'loss_trace.csv'}")


@cli.command("edit")
@click.option("--a", "tex_a", type=click.Path(), required=True, help="First texture stack.")
@click.option("--b", "tex_b", type=click.Path(), required=True, help="Second texture stack.")
@click.option("--parts", default="", help="Comma-separated part names whose texels are swapped.")
@click.option("--out-a", type=click.Path(), help="Output for the edited first stack.")
@click.option("--out-b", type=click.Path(), help="Output for the edited second stack.")
@click.pass_context
def edit_cmd(ctx, tex_a, tex_b, parts, out_a, out_b):
    """Swap the texels of the given parts between two texture stacks."""
    cfg = _config(ctx)
    a = ShellTextureStack.load(_need(Path(tex_a), "texture stack"))
    b = ShellTextureStack.load(_need(Path(tex_b), "texture stack"))
    if a.data.shape != b.data.shape:
        raise ValueError(f"texture shapes differ: {a.data.shape} vs {b.data.shape}")
    names = [p.strip() for p in parts.split(",") if p.strip()]
    _, H, W = a.shape
    region = region_from_parts(_rig(cfg), names, H, W)
    ea, eb = swap_region(a, b, region)
    out = Path(cfg.paths.output)
    pa = Path(out_a) if out_a else out / "edited_a.gstx"
    pb = Path(out_b) if out_b else out / "edited_b.gstx"
    ea.save(pa)
    eb.save(pb)
    click.echo(f"swapped {int(region.sum())} texels per shell; wrote {pa} and {pb}")


def bench_frames(avatar: Optional[GaussianAvatar], camera: Camera, frames: int, warmup: int,
                 threads: Optional[int]):
    """Per-frame deform+render times in ms; poses sway the arms deterministically."""
    opts = RenderOptions(threads=threads)
    times = []
    for k in range(warmup + frames):
        t0 = time.perf_counter()
        if avatar is None:
            scene = SplatScene.empty()
        else:
            rot = np.zeros((avatar.rig.n_joints, 3))
            for name, sign in (("l_shoulder", 1.0), ("r_shoulder", -1.0)):
                if name in avatar.rig.joint_names:
                    rot[avatar.rig.joint_index(name), 2] = sign * 0.3 * np.sin(0.2 * k)
            scene, _ = avatar.scene(Pose(rot))
        render(camera, scene, (1.0, 1.0, 1.0), opts)
        if k >= warmup:
            times.append(1e3 * (time.perf_counter() - t0))
    return np.array(times)


@cli.command("bench")
@click.option("--gaussians", type=int, help="Gaussian count for the synthetic scene (default: config).")
@click.option("--size", nargs=2, type=int, help="Image width and height.")
@click.option("--frames", type=int)
@click.option("--threads", type=int)
@click.option("--json-out", type=click.Path(), help="Also write the report here.")
@click.pass_context
def bench_cmd(ctx, gaussians, size, frames, threads, json_out):
    """Time deform+render per frame on the template; prints a JSON report."""
    from .demo import demo_avatar

    size = {"width": size[0], "height": size[1]} if size else {}
    cfg = _config(ctx, render={"threads": threads, **size}, bench={"frames": frames})
    r = cfg.representation
    count = r.gaussian_count if gaussians is None else gaussians
    if count < 0:
        raise ValueError("gaussian count must be non-negative")
    rig = _rig(cfg)
    stack = build_shell_stack(rig, r.n_shells, r.adjacent_offset)
    camera = default_camera(stack.vertex_array().reshape(-1, 3), cfg.render.width, cfg.render.height)
    avatar = None
    if count > 0:
        anchors = sample_gaussians(stack, max(count, stack.n_shells), r.seed)
        tex_size = min(r.texture_height, 256), min(r.texture_width, 256)
        avatar = demo_avatar(rig, stack, anchors, *tex_size, seed=r.seed)
    n_threads = _threads(cfg) or _backend.default_threads()
    t = bench_frames(avatar, camera, cfg.bench.frames, cfg.bench.warmup, n_threads)
    median = float(np.median(t))
    report = {
        "gaussians": count,
        "width": cfg.render.width,
        "height": cfg.render.height,
        "frames": int(len(t)),
        "threads": n_threads,
        "backend": _backend.NAME,
        "median_ms": median,
        "p95_ms": float(np.percentile(t, 95)),
        "gaussians_per_second": count / (median / 1e3) if median > 0 else 0.0,
    }
    text = json.dumps(report, indent=1)
    click.echo(text)
    if json_out:
        Path(json_out).write_text(text + "\n")


GOLDEN_KEY = "template_rest_128"


def golden_image_bytes(work: Path, threads: Optional[int] = None) -> bytes:
    """PNG bytes of the golden scene: the template as a single shell, 8000 Gaussians, default 128x128 camera.

    The tiled render must agree with the tile-free reference before it is hashed.
    """
    from .demo import demo_avatar

    rig = load_template()
    stack = build_shell_stack(rig, 1, 0.08)
    anchors = sample_gaussians(stack, 8000, 0)
    avatar = demo_avatar(rig, stack, anchors, 128, 128, seed=0)
    scene, _ = avatar.scene()
    cam = default_camera(stack.vertex_array().reshape(-1, 3), 128, 128)
    out = render(cam, scene, (1.0, 1.0, 1.0), RenderOptions(threads=threads))
    ref = render_reference(cam, scene, (1.0, 1.0, 1.0))
    diff = float(np.abs(out.color - ref.color).max())
    if diff > 1e-5:
        raise RuntimeError(f"tiled render differs from the reference by {diff:.3g}")
    path = work / "golden.png"
    save_png(path, out.color, out.alpha)
    return path.read_bytes()


@cli.command("golden")
@click.option("--hash-file", type=click.Path(), default="tests/golden_hashes.json", show_default=True)
@click.option("--update", is_flag=True, help="Record the current hash instead of checking it.")
@click.pass_context
def golden_cmd(ctx, hash_file, update):
    """Check (or with --update, record) the golden render hash."""
    cfg = _config(ctx)
    digest = hashlib.sha256(golden_image_bytes(Path(cfg.paths.output), _threads(cfg))).hexdigest()
    path = Path(hash_file)
    hashes = json.loads(path.read_text()) if path.exists() else {}
    if update:
        hashes[GOLDEN_KEY] = digest
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(hashes, indent=1, sort_keys=True) + "\n")
        click.echo(f"recorded {GOLDEN_KEY} = {digest}")
        return
    if GOLDEN_KEY not in hashes:
        raise KeyError(f"no recorded hash for {GOLDEN_KEY} in {path}; run with --update")
    if hashes[GOLDEN_KEY] != digest:
        raise RuntimeError(f"golden image changed: {digest} != {hashes[GOLDEN_KEY]}")
    click.echo(f"golden image matches ({digest[:16]})")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr)
    try:
        cli.main(args=argv, prog_name="gsmaps", standalone_mode=False)
    except CommandWarning as w:
        click.echo(f"warning: {w}", err=True)
        return EXIT_WARN
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except click.ClickException as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return EXIT_ERROR
    except (ConfigError, OSError, ValueError, KeyError, IndexError, RuntimeError, FloatingPointError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        click.echo(f"error: {msg}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
