"""Runtime configuration and run-config loading."""
