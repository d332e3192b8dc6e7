/// Checks brace balance (ignoring `\{` and `\}`) and that every
/// `\begin{env}` is closed by a matching `\end{env}` in LIFO order.
pub fn check_latex_balance(src: &str) -> Result<(), String> {
    let mut depth = 0usize;
    let mut envs: Vec<String> = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                let rest = &src[i + 1..];
                if rest.starts_with('{') || rest.starts_with('}') || rest.starts_with('\\') {
                    i += 2;
                    continue;
                }
                let mut consumed = 1;
                for (cmd, opening) in [("begin{", true), ("end{", false)] {
                    if let Some(after) = rest.strip_prefix(cmd) {
                        let close = after
                            .find('}')
                            .ok_or_else(|| format!("unterminated \\{cmd}...}}"))?;
                        let env = after[..close].to_string();
                        if opening {
                            envs.push(env);
                        } else {
                            match envs.pop() {
                                Some(open) if open == env => {}
                                Some(open) => {
                                    return Err(format!("\\end{{{env}}} closes \\begin{{{open}}}"))
                                }
                                None => return Err(format!("\\end{{{env}}} without \\begin")),
                            }
                        }
                        consumed = 1 + cmd.len() + close + 1;
                        break;
                    }
                }
                i += consumed;
            }
            b'{' => {
                depth += 1;
                i += 1;
            }
            b'}' => {
                depth = depth.checked_sub(1).ok_or("unbalanced `}`")?;
                i += 1;
            }
            _ => i += 1,
        }
    }
    if depth != 0 {
        return Err(format!("{depth} unclosed `{{`"));
    }
    if let Some(env) = envs.pop() {
        return Err(format!("\\begin{{{env}}} is never closed"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_inputs() {
        assert!(check_latex_balance(r"\frac{a}{b} + \{x\}").is_ok());
        assert!(check_latex_balance("\\begin{algorithmic}\n\\State $x \\gets 0$\n\\end{algorithmic}").is_ok());
        assert!(check_latex_balance(r"\begin{a}\begin{b}{}\end{b}\end{a}").is_ok());
    }

    #[test]
    fn unbalanced_inputs() {
        assert!(check_latex_balance(r"\frac{a}{b").is_err());
        assert!(check_latex_balance(r"x}").is_err());
        assert!(check_latex_balance(r"\begin{a}\end{b}").is_err());
        assert!(check_latex_balance(r"\begin{align} x").is_err());
        assert!(check_latex_balance(r"\end{align}").is_err());
    }
}
