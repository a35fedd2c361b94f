"""Neural Map memory, the Goal-Search maze task, baseline agents and a synchronous A2C trainer."""

__version__ = "0.1.0"
