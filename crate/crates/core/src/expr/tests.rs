// SPDX-License-Identifier: Apache-2.0

use super::*;
use proptest::prelude::*;

fn attrs(pairs: &[(&str, &str)]) -> Attributes {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn eval(text: &str, pairs: &[(&str, &str)]) -> Result<String, EvalError> {
    let a = attrs(pairs);
    parse(text).unwrap().evaluate(&EvalContext::new(&a, 0))
}

#[test]
fn plain_text_is_one_literal() {
    assert_eq!(
        parse("plain").unwrap().segments,
        vec![Segment::Literal("plain".into())]
    );
    assert!(parse("").unwrap().segments.is_empty());
}

#[test]
fn embedded_call_structure() {
    let e = parse("${lang:equals('en')}").unwrap();
    assert_eq!(
        e.segments,
        vec![Segment::Embedded(Embedded {
            subject: Subject::Attribute("lang".into()),
            calls: vec![Call {
                function: Function::Equals,
                args: vec![Arg::Quoted("en".into())],
            }],
        })]
    );
}

#[test]
fn nested_and_literal_subjects() {
    let e = parse("x${'a b':append(${c.d-e}):plus(-1.5)}y").unwrap();
    assert_eq!(e.segments.len(), 3);
    let Segment::Embedded(inner) = &e.segments[1] else {
        panic!()
    };
    assert_eq!(inner.subject, Subject::Literal("a b".into()));
    assert_eq!(inner.calls[1].args, vec![Arg::Number("-1.5".into())]);
}

#[test]
fn dollar_escapes() {
    assert_eq!(eval("$$5 and $x and $", &[]).unwrap(), "$5 and $x and $");
    assert_eq!(eval("$${a}", &[("a", "1")]).unwrap(), "${a}");
}

#[test]
fn parse_errors_carry_offsets() {
    let e = parse("${x:plus(").unwrap_err();
    assert_eq!(e.offset, 4);
    assert!(e.message.contains("unterminated"));

    let e = parse("ab${x").unwrap_err();
    assert_eq!(e.offset, 2);
    assert!(e.message.contains("unterminated"));

    let e = parse("${x:bogus()}").unwrap_err();
    assert_eq!(e.offset, 4);
    assert!(e.message.contains("unknown function"));

    let e = parse("${x:equals()}").unwrap_err();
    assert!(e.message.contains("argument"));
    let e = parse("${x:toUpper('a')}").unwrap_err();
    assert!(e.message.contains("argument"));

    let e = parse("${x:equals('abc)}").unwrap_err();
    assert_eq!(e.offset, 11);
    assert!(e.message.contains("quoted"));

    assert!(parse("${x:plus(1.)}").unwrap_err().message.contains("number"));
    assert!(parse("${x:plus(-)}").unwrap_err().message.contains("number"));
    assert!(parse("${}").is_err());
    assert!(parse("${x y}").is_err());
    assert!(parse("${x:plus(1 )}").is_err());
}

#[test]
fn evaluate_examples() {
    assert_eq!(
        eval("${title:toUpper()}", &[("title", "breaking news")]).unwrap(),
        "BREAKING NEWS"
    );
    assert_eq!(eval("${size:plus(5):gt(12)}", &[("size", "10")]).unwrap(), "true");
    assert_eq!(eval("${missing}", &[]).unwrap(), "");
    assert_eq!(eval("id=${uuid}", &[("uuid", "abc")]).unwrap(), "id=abc");
}

#[test]
fn boolean_is_strict() {
    let e = parse("${lang:equals('en')}").unwrap();
    let en = attrs(&[("lang", "en")]);
    let fr = attrs(&[("lang", "fr")]);
    assert!(e.evaluate_boolean(&EvalContext::new(&en, 0)).unwrap());
    assert!(!e.evaluate_boolean(&EvalContext::new(&fr, 0)).unwrap());
    let yes = parse("yes").unwrap();
    assert!(!yes.evaluate_boolean(&EvalContext::new(&en, 0)).unwrap());
    let t = parse("true").unwrap();
    assert!(t.evaluate_boolean(&EvalContext::new(&en, 0)).unwrap());
}

#[test]
fn eval_errors() {
    assert!(matches!(
        eval("${a:plus(1)}", &[("a", "x")]),
        Err(EvalError::NotANumber { function: "plus", .. })
    ));
    assert!(matches!(
        eval("${a:divide(0)}", &[("a", "4")]),
        Err(EvalError::DivideByZero { .. })
    ));
    assert!(matches!(
        eval("${a:mod(0)}", &[("a", "4")]),
        Err(EvalError::DivideByZero { .. })
    ));
    assert!(matches!(
        eval("${a:matches('(')}", &[("a", "4")]),
        Err(EvalError::InvalidRegex { .. })
    ));
    assert!(matches!(
        eval("${a:multiply(1000000000000000000000000000000000000):multiply(${a})}", &[("a", "1e300")]),
        Err(EvalError::NonFinite { .. })
    ));
}

#[test]
fn number_rendering() {
    assert_eq!(format_number(15.0), "15");
    assert_eq!(format_number(-0.0), "0");
    assert_eq!(format_number(2.5), "2.5");
    assert_eq!(format_number(0.1 + 0.2), "0.30000000000000004");
    assert_eq!(format_number(1e20), "100000000000000000000");
}

#[test]
fn function_table_is_complete() {
    assert_eq!(Function::ALL.len(), 29);
    for f in Function::ALL {
        assert_eq!(Function::lookup(f.name()), Some(*f));
    }
}

fn arb_quoted() -> impl Strategy<Value = String> {
    "[a-z '\\\\$]{0,6}"
}

fn arb_embedded() -> impl Strategy<Value = Embedded> {
    let subject = prop_oneof![
        "[A-Za-z_][A-Za-z0-9_.-]{0,6}".prop_map(Subject::Attribute),
        arb_quoted().prop_map(Subject::Literal),
    ];
    let leaf = (subject.clone(), Just(Vec::<Call>::new()))
        .prop_map(|(subject, calls)| Embedded { subject, calls });
    leaf.prop_recursive(3, 24, 4, move |inner| {
        let arg = prop_oneof![
            arb_quoted().prop_map(Arg::Quoted),
            "-?[0-9]{1,3}(\\.[0-9]{1,2})?".prop_map(Arg::Number),
            inner.prop_map(Arg::Embedded),
        ];
        let call = (proptest::sample::select(Function::ALL), proptest::collection::vec(arg, 2))
            .prop_map(|(function, mut args)| {
                args.truncate(function.arity());
                Call { function, args }
            });
        (subject.clone(), proptest::collection::vec(call, 0..4))
            .prop_map(|(subject, calls)| Embedded { subject, calls })
    })
}

fn arb_expression() -> impl Strategy<Value = CompiledExpression> {
    let seg = prop_oneof![
        "[a-z ${}:']{1,6}".prop_map(Segment::Literal),
        arb_embedded().prop_map(Segment::Embedded),
    ];
    proptest::collection::vec(seg, 0..5).prop_map(|segments| CompiledExpression { segments })
}

proptest! {
    #[test]
    fn round_trip_is_stable(tree in arb_expression()) {
        let text = tree.to_string();
        let parsed = parse(&text).unwrap();
        let again = parse(&parsed.to_string()).unwrap();
        prop_assert_eq!(&again, &parsed);
    }

    #[test]
    fn evaluation_is_pure_and_deterministic(
        tree in arb_expression(),
        values in proptest::collection::btree_map("[a-z]{1,2}", "[0-9a-z]{0,3}", 0..5),
    ) {
        let before = values.clone();
        let ctx = EvalContext::new(&values, 42);
        let first = tree.evaluate(&ctx);
        let second = tree.evaluate(&ctx);
        prop_assert_eq!(first, second);
        prop_assert_eq!(&values, &before);
    }
}
