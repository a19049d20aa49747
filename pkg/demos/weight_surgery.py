"""Adapt an RGB classifier archive to mono log-mel input and a new label set.

Run: python3 demos/weight_surgery.py
"""

from aedkit.model import ModelConfig, build, save_weights
from aedkit.surgery import average_input_channels, compatibility_check, delete_middle_flow, replace_head

rgb = save_weights(build(ModelConfig(middle_repeats=8, width_multiplier=0.25, n_classes=1000, input_channels=3)))
target = ModelConfig(middle_repeats=0, width_multiplier=0.25, n_classes=50)

print("before surgery:")
report = compatibility_check(rgb, target).lines()
for line in report[:5]:
    print("  " + line)
print(f"  ... {len(report) - 5} more")

mono = delete_middle_flow(replace_head(average_input_channels(rgb), 50, rng=0), 0)
after = compatibility_check(mono, target)
print("after surgery:", "loadable" if after.empty else after.lines())
print("audit trail:")
for line in mono.audit_trail():
    print("  " + line)
