"""trialworks: distributed multi-actor trial orchestration.

Services, CLI clients, and browser clients interact with an environment over
envelope frames; the orchestrator runs the lock-step tick loop, aggregates
multi-source (possibly retroactive) rewards, and logs every trial for replay.
"""

__version__ = "0.1.0"
