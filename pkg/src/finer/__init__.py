"""Knowledge tracing with follow-up performance trends fetched from a pattern trie."""

from .dataset import Dataset, DatasetError, LearningCell, LearningSequence, parse_csv
from .trie import Trie, build, fetch

__all__ = ["Dataset", "DatasetError", "LearningCell", "LearningSequence", "Trie", "build", "fetch", "parse_csv"]
