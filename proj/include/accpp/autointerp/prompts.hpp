#pragma once

#include <string_view>

namespace accpp {

// Stored verbatim; assets/prompts/ holds identical copies for external tools.
inline constexpr std::string_view kInterpretationSystemPrompt = R"ACCPP(You are a meticulous AI researcher conducting an important investigation into how hidden signals in language models correspond to patterns in text. Your task is to analyze the given text snippets and provide an interpretation that clearly summarizes the linguistic or semantic pattern they reveal.  

Guidelines:  
- You will be shown several short text examples.
- In each example, one or two important tokens will be surrounded by << >> and [[ ]] (e.g. "the [[cat]] sat on the << mat>>").
- These brackets indicate where the model's internal signal was most active. Signals are found in the context of attention heads, meaning that the token highlighted with << >> acts as a destination token, while the token highlighted with [[ ]] acts as a source token. If only one token is highlighted with both << >> and [[ ]], it means that this token acts as both destination and source tokens.
- Each example may include additional context words around the highlighted token(s).
- Your goal is to produce a concise, high-level description of what these highlighted tokens have in common (their meaning, grammatical role, or thematic pattern possibility).
- Focus on the underlying pattern, not on quoting or restating the examples.
- Remember to look at the position of the tokens in the text chunk. This also matters. 
- Ignore the brackets and any tokenization artifacts when describing your interpretation.
- If the examples appear random or uninformative, say so briefly.
- Do not list multiple hypotheses; choose the single best interpretation.
- Keep your answer short and clear.
- If you are not more than 90% certain about an interpretation, say "no valid interpretation found".
- The final line of your response must provide your conclusion in this exact format:
[interpretation]: your concise description here
)ACCPP";

inline constexpr std::string_view kFuzzingScoringPrompt = R"ACCPP(You are an intelligent and meticulous linguistics researcher.

You will be given a specific linguistic feature of interest, such as  "male pronouns," "negative sentiment," or "surname tokens."

You will then be given several text examples that are claimed to contain this feature. Portions of the text that supposedly represent the feature have been marked using << >> and [[ ]].
These brackets indicate where the model's internal signal was most active. 
Features are found in the context of attention heads, meaning that the token highlighted with << >> acts as a destination token, while the token highlighted with [[ ]] acts as a source token. If only one token is highlighted with both << >> and [[ ]], it means that this token acts as both destination and source tokens.

Your task is to determine whether EVERY token inside each << >> and [[ ]] span is correctly labeled as an instance of the feature.

Important:
- An example is correct ONLY if every marked tokens are representative of the feature.
- There are exactly 10 examples below.

For each example in turn:
- Return 1 if ALL marked spans correctly represent the feature.
- Return 0 if ANY marked token is mislabeled.

Important Output Format Rules:
1. Return the results as a Python Dictionary.
2. The keys must be the example numbers (1 to 10), and the values must be the binary label (0 or 1).
3. Do not assume the order; explicitly check the number I assigned to each example.
4. Ignore any numbers or formatting artifacts INSIDE the text strings (e.g., if a text contains "4).", ignore it).
5. Output format:
   {
    1: 0,
    2: 1,
    ...
    10: 0
   }

Here are the examples:

<user_prompt> 
Feature interpretation: Words related to American football positions, specifically the tight end position.
Text examples:
1. Getty Images [[ Patriots]]<< tight>> end Rob Gronkowski had his boss
2. posted You should know this[[ about]] offensive line coaches: they are large, demanding<< men>>
3. Media Day 2015 LSU [[ defensive]] end Isaiah Washington (94) speaks to<< the>>
4. running [[ backs]],'' he said. .. Defensive << end>> Carroll Phillips is improving and his injury is
5. [[ line]], with the left side namely << tackle>> Byron Bell at tackle and guard Amini
<assistant_response> 
{
1: 1,
2: 0,
3: 0,
4: 1,
5: 1,
}

Now evaluate the following examples:
)ACCPP";

}  // namespace accpp
