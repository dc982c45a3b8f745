"""Smoke test for the s2st_py extension module.

Run after building the module, either with `maturin develop` in
crates/python or with

    cargo build --release -p s2st-python --features extension-module

in which case the shared library is picked up from target/release.
"""

import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_module():
    try:
        import s2st_py  # noqa: F401
    except ImportError:
        for profile in ("release", "debug"):
            lib = ROOT / "target" / profile / "libs2st_py.so"
            if lib.exists():
                where = Path(tempfile.mkdtemp())
                shutil.copy(lib, where / "s2st_py.so")
                sys.path.insert(0, str(where))
                break
        else:
            sys.exit("s2st_py not importable and no built library under target/")
    import s2st_py

    return s2st_py


CONFIG = """profile = "toy"
seed = 2

[model]
prompt_enabled = true
enc_dim = 16
enc_heads = 2
ffn_dim = 32
dec_dim = 16
dec_heads = 2
dec_ffn_dim = 32
prenet_hidden = 16
prenet_bottleneck = 8
aux_dim = 16
aux_ffn_dim = 32
postnet_channels = 8
postnet_layers = 2

[toy]
n_phones = 4
n_primary = 3
n_secondary = 6
n_eval = 2
conflicts = 2

[paths]
primary = "data/primary.jsonl"
secondary = "data/secondary.jsonl"
eval = "data/eval.jsonl"
output_dir = "out"

[[stages]]
kind = "pretrain"
max_steps = 2
warmup_steps = 1

[[stages]]
kind = "prompt"
max_steps = 2
warmup_steps = 1
"""


def main():
    s2st = import_module()

    v = s2st.bleu(["the cat sat"], ["the cat sat down"])
    assert abs(v - 71.65313105737893) < 1e-6, v
    assert s2st.phoneme_error_rate(["a", "b", "c"], ["a", "c"]) == 1 / 3
    try:
        s2st.phoneme_error_rate([], ["a"])
    except ValueError:
        pass
    else:
        raise AssertionError("empty reference accepted")

    with tempfile.TemporaryDirectory() as d:
        os.environ.pop("S2ST_OUTPUT_ROOT", None)
        cfg = Path(d) / "run.toml"
        cfg.write_text(CONFIG)
        resolved = json.loads(s2st.load_config(str(cfg), ["seed=3"]))
        assert resolved["seed"] == 3
        try:
            s2st.load_config(str(cfg), ["model.tap_src=9"])
        except ValueError as e:
            assert "tap_src" in str(e)
        else:
            raise AssertionError("bad override accepted")

        files = s2st.gen_toy(str(cfg))
        assert any(f.endswith("primary.jsonl") for f in files)
        s2st.train_stage(str(cfg), "pretrain")
        ckpt = s2st.train_stage(str(cfg), "prompt")
        assert Path(ckpt).exists()

        src = json.loads((Path(d) / "data/eval.jsonl").read_text().splitlines()[1])["src_audio"]
        out = s2st.translate(ckpt, src, str(Path(d) / "y.wav"), "secondary", str(cfg))
        assert all(Path(p).exists() for p in out)

        report = json.loads(s2st.evaluate(str(cfg), ckpt))
        assert report["n_utterances"] == 2

    print("s2st_py smoke test passed")


if __name__ == "__main__":
    main()
