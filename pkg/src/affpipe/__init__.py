"""affpipe: binary animal emotion classification from facial images via
linear probes on frozen pretrained vision backbones."""

__version__ = "0.1.0"
