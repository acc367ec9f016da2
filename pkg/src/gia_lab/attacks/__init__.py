"""Attack implementations: optimization-, generation-, and analytics-based."""
