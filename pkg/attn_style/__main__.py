from attn_style.cli import run


run()
