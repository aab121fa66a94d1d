"""Analytic FLOPs of the four reference presets and two design sweeps.

Run: python demos/flops_sweeps.py
"""
from dmdt import flops

NAMES = ("paper-transvg", "paper-static-decoder", "paper-sampling-only", "paper-dynamic")

print("presets (1 FLOP per multiply-add)")
for name in NAMES:
    print(f"  {name:<22} {flops.model_flops(flops.preset(name)).gflops:7.3f} GFLOPS")

print("\nper-component breakdown of paper-dynamic")
print(flops.model_flops(flops.preset("paper-dynamic")).table())

print("\nsplitting six layers between encoder and decoder")
print(flops.sweep_table(flops.layer_split_sweep()))

print("\nnumber of sampling points")
print(flops.sweep_table(flops.points_sweep()))

print("\ndecoder layer cost as the visual grid grows")
for n in (100, 400, 1600, 6400):
    print(f"  N_v={n:<5} {flops.decoder_layer_flops(flops.preset('paper-dynamic', n_visual=n)):,}")
