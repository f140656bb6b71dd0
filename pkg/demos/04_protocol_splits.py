#!/usr/bin/env python3
"""The four benchmark families and their eleven sub-protocols.

    python3 demos/04_protocol_splits.py
"""

from padkit.datasyn import canonical_manifest
from padkit.protocols import SUB_PROTOCOLS, build_split, validate_split

manifest = canonical_manifest()
two_d = sum(1 for e in manifest if not e.is_3d)
print(f"canonical corpus shape: {two_d} 2D clips + "
      f"{len(manifest) - two_d} 3D-attack clips\n")

header = (f"{'sub':>4} {'train real/fake':>16} {'valid real/fake':>16} "
          f"{'test 2D real/fake':>18} {'3D in test':>10} {'disjoint':>9}")
print(header)
print("-" * len(header))
for sub_id in SUB_PROTOCOLS:
    split = build_split(manifest, sub_id)
    r = validate_split(split)
    c = r.counts
    print(f"{sub_id:>4} {c['train_real']:>7}/{c['train_fake']:<8} "
          f"{c['valid_real']:>7}/{c['valid_fake']:<8} "
          f"{c['test_real_2d']:>8}/{c['test_fake_2d']:<9} "
          f"{c['test_3d']:>10} {str(r.ok):>9}")

print("\nwhat each family holds out:")
for sub_id, text in (("1_2", "ethnicities: fit Central Asia, test Africa + East Asia"),
                     ("2_1", "attack family: fit print, test replay"),
                     ("3_3", "modality: fit infrared, test color + depth"),
                     ("4_1", "both: fit Africa replay, test other ethnicities print")):
    f = build_split(manifest, sub_id).filters
    print(f"  {sub_id}  {text}")
    print(f"       train eth={f.train_ethnicities} mod={f.train_modalities} "
          f"attacks={f.train_attacks}")
    print(f"       test  eth={f.test_ethnicities} mod={f.test_modalities} "
          f"attacks={f.test_attacks}")
