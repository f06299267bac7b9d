"""Full-scale trainer: fine-tunes ImageNet-pretrained ResNet backbones on the
composite exports produced by the preprocessing pipeline.

The package only touches the pipeline's external files (composites.csv, the
per-record PNGs, and split.json) and emits reports in the pipeline's scenario
report JSON schema, so results render through the same tooling.
"""

__version__ = "0.1.0"
