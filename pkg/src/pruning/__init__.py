"""Pattern pruning pipeline: grouping, pattern dictionaries, pruning, reporting."""
