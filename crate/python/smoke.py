"""Smoke test for the styleinject Python bindings.

Build first:  cd crates/py && maturin develop --release
"""

import json

import styleinject as si


def main():
    h = w = 16
    content = si.Image.from_pixels(h, w, [((c + y + 2 * x) % 9) / 8 for c in range(3) for y in range(h) for x in range(w)])
    style = si.Image.solid(h, w, [0.9, 0.2, 0.1])
    assert content.size == (h, w)

    cfg = si.InjectionConfig(alpha=0.2, sample_steps=10)
    assert cfg.attn_layers == list(range(4, 12))
    assert cfg.residual_layers == list(range(3, 9))
    assert cfg.deciding_point() == si.deciding_point(0.2, 10) == 2

    try:
        si.InjectionConfig(alpha=1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha outside [0, 1] must raise")

    engine = si.Engine(channels=8, patch=1)
    assert len(engine.layers()) == 18

    result = engine.transfer(content, style, cfg, prompt="a test pattern", seed=1)
    assert result.counts() == (8, 2, 0), result.counts()
    assert result.modes()[0] == "content" and result.modes()[-1] == "style"
    assert json.loads(result.trace_json())["deciding_point"] == 2
    png = result.image.to_png()
    assert png[1:4] == b"PNG"

    again = engine.transfer(content, style, cfg, prompt="a test pattern", seed=1)
    assert again.image.to_png() == png, "runs must be deterministic"

    results, inversions = engine.sweep(content, style, [0.0, 0.5, 1.0], si.InjectionConfig(sample_steps=6))
    assert inversions == 1 and len(results) == 3

    latents = engine.invert(content, steps=6, t_hi=3)
    assert len(latents) == 3 and len(latents[0]) == 3 * h * w

    assert si.pixel_mse(content, content) == 0.0
    assert si.content_loss(result.image, content) >= 0.0
    assert si.style_loss(style, style) == 0.0
    print("python smoke test passed")


if __name__ == "__main__":
    main()
