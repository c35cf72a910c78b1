# pytest_plugins.py - Runs before conftest.py
# This file is loaded by pytest before conftest.py due to being a plugin
import os

# Set environment variables for tests BEFORE Django loads
os.environ["DJANGO_SETTINGS_MODULE"] = "config.settings.test"
os.environ.setdefault("LOG_LEVEL", "WARNING")
os.environ.setdefault("GCA_STRICT_CHECKPOINTS", "true")
