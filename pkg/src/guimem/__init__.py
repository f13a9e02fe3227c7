"""guimem: a plug-in working/episodic memory runtime for long-horizon GUI
agents, with a trajectory-to-training-data curation pipeline and a
memory-aware evaluation harness around pluggable model backends."""

__version__ = "0.1.0"
