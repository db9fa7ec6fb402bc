"""Which heads carry the binding, and what do they look at?

Causal mediation over all heads for the three conditions, then the
attention profile of each winning head.

    python3 demos/02_heads_and_attention.py [out_dir]
"""
import sys
from pathlib import Path

from vlbind.attnprof import attention_profile, mean_profile
from vlbind.backend import make_synthetic_backend
from vlbind.cma import CONDITION_KINDS, build_condition, cma_map, top_heads
from vlbind.scenegen import GeneratorConfig, build_prompt, generate_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
be = make_synthetic_backend()
ds = generate_dataset(GeneratorConfig("2x2", k=1, seed=0))

for kind in CONDITION_KINDS:
    m = cma_map(be, build_condition(ds, kind, 5, seed=0))
    m.heatmap(out / f"cma_{kind}.png")
    (l, h), = top_heads(m, 1)
    print(f"{kind:26s} top head {l}.{h}  s={m.scores[l, h]:.3f}")

    insts = [build_prompt(s, "scene_description") for s in ds.scenes[:8]]
    if kind == "semantic_matching":
        # the matching head is read from the described object's color word
        profs = [attention_profile(be, i, [(l, h)], be.resolve_layout(i).caption_colors[0]) for i in insts]
    else:
        profs = [attention_profile(be, i, [(l, h)]) for i in insts]
    p = mean_profile(profs)
    top = sorted(zip(p.values[0], p.groups), reverse=True)[:3]
    print("    attends to: " + ", ".join(f"{g} {v:.2f}" for v, g in top))
print(f"\nheatmaps in {out}/")
