"""Train a small HMLSTM on synthetic text and look at where its layers place boundaries.

    python demos/segment_text.py --iterations 300

Prints validation bpc after each epoch, then the first stretch of held-out
text twice: once with a bar after every character where layer 1 fires, once
for layer 2.  Also writes segmentation.tsv / segmentation.pgm.
"""
import argparse
import math

from hmlstm.analysis import boundary_agreement, evaluate_bpc, extract_segmentation, format_ratio, render_segmentation
from hmlstm.cells import CellFlags
from hmlstm.data import corpus_from_text, synthetic_text
from hmlstm.model import ModelConfig
from hmlstm.training import TrainConfig, Trainer


def marked(text, z):
    return "".join(ch + ("|" if b else "") for ch, b in zip(text, z))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--chars", type=int, default=200_000)
    ap.add_argument("--units", type=int, default=64)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = corpus_from_text(synthetic_text(args.chars, seed=args.seed))
    V = len(corpus.vocab)
    mc = ModelConfig(units=args.units, embed_dim=32, output_dim=args.units, vocab_size=V, seed=args.seed,
                     flags=CellFlags(use_layer_norm=True, slope_alpha=0.5))
    tc = TrainConfig(batch=32, seq_len=100, valid_chars=5000, seed=args.seed)
    trainer = Trainer(mc, tc, corpus)
    print(f"vocabulary {V} characters, uniform model scores {math.log2(V):.3f} bpc")

    def show(tr, rec):
        valid = "n/a" if rec["valid_bpc"] is None else f"{rec['valid_bpc']:.3f}"
        print(f"epoch {rec['epoch']}: train {rec['train_loss'] / math.log(2):.3f} bpc, "
              f"valid {valid} bpc, z1 {rec['z1']:.3f}, z2 {rec['z2']:.3f}")

    result = trainer.run(max_iterations=args.iterations, callbacks=[show])
    held_out = corpus.vocab.decode(corpus.test[:4000])
    print(f"test bpc after {result.iterations} iterations: {evaluate_bpc(result.model, corpus.test[:4000]):.3f}")

    rec = extract_segmentation(result.model, corpus.vocab, held_out)
    print(f"\nz1 {rec.freq1:.3f}  z2 {rec.freq2:.3f}  z-ratio {format_ratio(rec.z_ratio)}")
    for name in ("z1", "z2"):
        a = boundary_agreement(rec, name)
        p = "n/a" if a.precision is None else f"{a.precision:.2f}"
        print(f"{name} vs spaces (+-1 char): precision {p}, recall {a.recall:.2f}")
    print("\nlayer 1:", marked(held_out[:160], rec.z1))
    print("\nlayer 2:", marked(held_out[:160], rec.z2))
    render_segmentation(rec, "segmentation.tsv")
    render_segmentation(rec, "segmentation.pgm")
    print("\nwrote segmentation.tsv and segmentation.pgm")


if __name__ == "__main__":
    main()
