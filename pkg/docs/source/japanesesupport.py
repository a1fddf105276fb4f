import re

# 改行の前後どちらかが和文文字なら空白を入れずに連結する
_CJK = r"　-ヿ㐀-䶿一-鿿＀-￯"
_CJK_BREAK = re.compile(rf"(?<=[{_CJK}])[ \t]*[\r\n]+[ \t]*|[ \t]*[\r\n]+[ \t]*(?=[{_CJK}])")
_OTHER_BREAK = re.compile(r"[ \t]*[\r\n]+[ \t]*")


def join_lines(text: str) -> str:
    """段落内の改行を詰める。欧文どうし（``p_EC50 value`` など）の改行は空白1つにする"""
    text = _CJK_BREAK.sub("", text)
    return _OTHER_BREAK.sub(" ", text)


def trunc_whitespace(app, doctree, docname):
    from docutils.nodes import Text, paragraph

    if not app.config.japanesesupport_trunc_whitespace:
        return
    for node in doctree.traverse(Text):
        if isinstance(node.parent, paragraph):
            node.parent.replace(node, Text(join_lines(node.astext())))


def setup(app):
    app.add_config_value("japanesesupport_trunc_whitespace", True, True)
    app.connect("doctree-resolved", trunc_whitespace)
