"""Bundled data files: a toy commonsense KB and a fixture corpus."""
