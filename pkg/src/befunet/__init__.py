"""BEFUnet: dual-branch edge/body segmentation network."""
