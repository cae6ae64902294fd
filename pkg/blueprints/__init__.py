"""
Blueprints package initialization

Each module exposes a flask Blueprint (cli_group=None); its CLI commands
are merged into app.cli by app.register_blueprints.
"""
