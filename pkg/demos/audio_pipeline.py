"""From one recording to a grid of augmented log-Mel views.

Synthesizes a short vowel-like recording, draws a handful of augmented 2 s
clips from it (each clip names the operation that produced it), and plots the
1 s log-Mel spectrogram a student would be trained on for each clip.

    python3 demos/audio_pipeline.py --out /tmp/audio-demo
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from onedatum.audioforge.clips import SourceClip, generate_clip, training_view  # noqa: E402
from onedatum.audioforge.spectrogram import compute_logmel  # noqa: E402

SR = 16_000


def vowel_recording(seconds=4.0, seed=0):
    """A gliding harmonic tone with two formant-like resonances and breath noise."""
    g = np.random.default_rng(seed)
    t = np.arange(int(seconds * SR)) / SR
    f0 = 140 + 30 * np.sin(2 * np.pi * 0.5 * t)
    phase = 2 * np.pi * np.cumsum(f0) / SR
    x = sum(np.sin(k * phase) * (np.exp(-((k * 140 - 700) / 300) ** 2) + 0.6 * np.exp(-((k * 140 - 1200) / 250) ** 2))
            for k in range(1, 30))
    x = x * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t) ** 2) + 0.02 * g.standard_normal(len(t))
    return (0.8 * x / np.abs(x).max()).astype(np.float32)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="audio-demo")
    ap.add_argument("--clips", type=int, default=8)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    src = SourceClip(vowel_recording())
    fig, axes = plt.subplots(2, (args.clips + 1) // 2, figsize=(3 * ((args.clips + 1) // 2), 6))
    for i, ax in zip(range(args.clips), axes.flat):
        clip, op = generate_clip(src, i, global_seed=0, return_op=True)
        view = training_view(clip, np.random.default_rng(i))
        mel = compute_logmel(view)
        ax.imshow(mel.T, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(f"#{i}: {op}", fontsize=9)
        ax.set_xlabel("frame")
        print(f"clip {i}: {op:<22} log-Mel {mel.shape}, range [{mel.min():.1f}, {mel.max():.1f}]")
    axes.flat[0].set_ylabel("mel bin")
    fig.tight_layout()
    fig.savefig(out / "logmel_grid.png", dpi=110)
    print(f"wrote {out / 'logmel_grid.png'}")


if __name__ == "__main__":
    main()
