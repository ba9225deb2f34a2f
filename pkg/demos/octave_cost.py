"""Compute and parameter cost of the toy U-Net as the octave ratio grows.

    python3 demos/octave_cost.py
"""

from tumorseg.octnet import ToyUNetConfig, build_toy_unet

print(f"{'alpha':>5} {'MACs @32^3':>14} {'params':>8}")
for alpha in (0.0, 0.25, 0.5, 0.75):
    m = build_toy_unet(ToyUNetConfig(alpha=alpha))
    print(f"{alpha:>5.2f} {m.mac_count((32, 32, 32)):>14,} {m.n_parameters():>8,}")
print("\nThe four kernel paths partition the full kernel, so weights are unchanged;")
print("only compute shrinks.  The per-path biases add a few parameters on top.")
