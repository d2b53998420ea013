import sys

from ui.navigation import CommandApp

if __name__ == "__main__":
    app = CommandApp()
    sys.exit(app.main_menu())
