"""Template-deformation shape modeling of the lateral ventricle with a joint hippocampus prior."""
